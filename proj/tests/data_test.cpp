#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <vector>

#include <gtest/gtest.h>

#include "scei/data.hpp"
#include "test_util.hpp"

namespace scei {
namespace {

void put_be32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) b.push_back(std::uint8_t(v >> s));
}

void write_bytes(const std::filesystem::path& p, const std::vector<std::uint8_t>& b) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(b.data()), std::streamsize(b.size()));
}

struct IdxFiles {
  std::filesystem::path images, labels;
};

// Three 2x2 images with labels 0, 9, 4.
IdxFiles write_tiny_idx(const std::string& name, std::uint32_t image_magic = kIdxImagesMagic,
                        std::uint32_t label_count = 3, std::size_t drop_pixels = 0) {
  auto dir = testing_util::temp_dir(name);
  std::vector<std::uint8_t> img;
  put_be32(img, image_magic);
  put_be32(img, 3);
  put_be32(img, 2);
  put_be32(img, 2);
  for (int i = 0; i < 12; ++i) img.push_back(std::uint8_t(i * 20));
  img.resize(img.size() - drop_pixels);
  std::vector<std::uint8_t> lab;
  put_be32(lab, kIdxLabelsMagic);
  put_be32(lab, label_count);
  for (std::uint8_t l : {0, 9, 4}) lab.push_back(l);
  IdxFiles f{dir / "images", dir / "labels"};
  write_bytes(f.images, img);
  write_bytes(f.labels, lab);
  return f;
}

LoadErrc load_error_code(const IdxFiles& f) {
  try {
    load_mnist_idx(f.images.string(), f.labels.string());
  } catch (const LoadError& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected a LoadError";
  return LoadErrc::kOpenFailed;
}

TEST(LoadMnistIdx, ParsesAndScales) {
  auto f = write_tiny_idx("idx_ok");
  auto ds = load_mnist_idx(f.images.string(), f.labels.string());
  ASSERT_EQ(ds.size(), 3u);
  EXPECT_EQ(ds.input_dim(), 4u);
  EXPECT_EQ(ds.labels, (std::vector<int>{0, 9, 4}));
  EXPECT_EQ(ds.num_classes, 10u);
  EXPECT_DOUBLE_EQ(ds.features(1, 2), 120.0 / 255.0);
  EXPECT_DOUBLE_EQ(ds.features(2, 3), 220.0 / 255.0);
}

TEST(LoadMnistIdx, DistinctErrors) {
  EXPECT_EQ(load_error_code(write_tiny_idx("idx_magic", kIdxLabelsMagic)), LoadErrc::kWrongMagic);
  EXPECT_EQ(load_error_code(write_tiny_idx("idx_trunc", kIdxImagesMagic, 3, 3)),
            LoadErrc::kTruncated);
  EXPECT_EQ(load_error_code(write_tiny_idx("idx_count", kIdxImagesMagic, 4)),
            LoadErrc::kCountMismatch);
  EXPECT_EQ(load_error_code({"/nonexistent/a", "/nonexistent/b"}), LoadErrc::kOpenFailed);
}

TEST(LoadMnistIdx, OfficialTestFiles) {
  const char* dir = std::getenv("SCEI_MNIST_DIR");
  if (!dir) GTEST_SKIP() << "SCEI_MNIST_DIR not set";
  const std::filesystem::path d(dir);
  if (!std::filesystem::exists(d / "t10k-images-idx3-ubyte"))
    GTEST_SKIP() << "MNIST test files not found in " << dir;
  auto ds = load_mnist_idx((d / "t10k-images-idx3-ubyte").string(),
                           (d / "t10k-labels-idx1-ubyte").string());
  EXPECT_EQ(ds.size(), 10000u);
  EXPECT_EQ(ds.input_dim(), 784u);
  EXPECT_EQ(ds.num_classes, 10u);
  EXPECT_GE(ds.features.minCoeff(), 0.0);
  EXPECT_LE(ds.features.maxCoeff(), 1.0);
}

TEST(GenerateSynthetic, DeterministicPerSeed) {
  auto a = generate_synthetic(3, 20, 5, 2.0, 42);
  auto b = generate_synthetic(3, 20, 5, 2.0, 42);
  EXPECT_EQ(a.features, b.features);
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_NE(a.features, generate_synthetic(3, 20, 5, 2.0, 43).features);
  EXPECT_EQ(a.size(), 60u);
}

TEST(GenerateSynthetic, WellSeparatedClassesAreLearnable) {
  auto ds = generate_synthetic(2, 200, 10, 10.0, 5);
  std::vector<std::size_t> train, test;
  for (std::size_t i = 0; i < ds.size(); ++i) (i % 4 == 0 ? test : train).push_back(i);
  auto tr = ds.subset(train);
  auto te = ds.subset(test);
  const MlpArchitecture arch{10, {8, 8}, 2};
  auto p = sgd_train(init_params(arch, 1), arch, TrainingConfig{10, 5, 0.01, 2}, tr.examples());
  EXPECT_GT(evaluate(p, arch, te.examples()), 0.95);
}

TEST(GenerateSynthetic, ZeroSeparationIsIndistinguishable) {
  auto ds = generate_synthetic(2, 1500, 4, 0.0, 5);
  std::vector<std::size_t> train, test;
  for (std::size_t i = 0; i < ds.size(); ++i) (i % 3 == 0 ? test : train).push_back(i);
  const MlpArchitecture arch{4, {8, 8}, 2};
  auto p = sgd_train(init_params(arch, 1), arch, TrainingConfig{10, 3, 0.01, 2},
                     ds.subset(train).examples());
  EXPECT_NEAR(evaluate(p, arch, ds.subset(test).examples()), 0.5, 0.06);
}

PartitionSpec desk_partition(std::uint64_t seed = 3) {
  PartitionSpec s;
  s.num_nodes = 10;
  s.samples_per_node = 600;
  s.labels_per_node = 4;
  s.rng_seed = seed;
  return s;
}

TEST(PartitionNonIid, RecountPerLabelAndSplit) {
  const auto ds = generate_synthetic(10, 1500, 3, 1.0, 1);
  const auto splits = partition_non_iid(ds, desk_partition());
  ASSERT_EQ(splits.size(), 10u);
  for (const auto& s : splits) {
    EXPECT_EQ(s.assigned_labels.size(), 4u);
    EXPECT_EQ(s.train.size(), 480u);
    EXPECT_EQ(s.test.size(), 120u);
    EXPECT_EQ(s.base_test_size, 120u);
    std::map<int, int> counts;
    for (auto i : s.base_indices) ++counts[ds.labels[i]];
    for (int label : s.assigned_labels) EXPECT_EQ(counts[label], 150);
    EXPECT_EQ(counts.size(), 4u);
    for (int l : s.train.labels) EXPECT_TRUE(s.assigned_labels.contains(l));
    for (int l : s.test.labels) EXPECT_TRUE(s.assigned_labels.contains(l));
  }
}

TEST(PartitionNonIid, NoExampleUsedTwice) {
  const auto ds = generate_synthetic(10, 1500, 3, 1.0, 1);
  for (std::uint64_t seed : {1, 2, 3, 4}) {
    std::set<std::size_t> seen;
    std::size_t total = 0;
    for (const auto& s : partition_non_iid(ds, desk_partition(seed))) {
      seen.insert(s.base_indices.begin(), s.base_indices.end());
      total += s.base_indices.size();
    }
    EXPECT_EQ(seen.size(), total);
  }
}

TEST(PartitionNonIid, SingleNodeGetsPermutationOfInput) {
  const auto ds = generate_synthetic(3, 10, 2, 1.0, 9);
  PartitionSpec s;
  s.num_nodes = 1;
  s.samples_per_node = 30;
  s.labels_per_node = 3;
  s.rng_seed = 4;
  const auto splits = partition_non_iid(ds, s);
  ASSERT_EQ(splits.size(), 1u);
  auto idx = splits[0].base_indices;
  std::sort(idx.begin(), idx.end());
  for (std::size_t i = 0; i < idx.size(); ++i) EXPECT_EQ(idx[i], i);
  EXPECT_EQ(splits[0].train.size() + splits[0].test.size(), 30u);

  // Rows of train ++ test are a permutation of the input rows.
  auto key = [](const Matrix& m, Eigen::Index i) { return std::make_pair(m(i, 0), m(i, 1)); };
  std::multiset<std::pair<double, double>> in, out;
  for (Eigen::Index i = 0; i < ds.features.rows(); ++i) in.insert(key(ds.features, i));
  for (const auto* part : {&splits[0].train, &splits[0].test})
    for (Eigen::Index i = 0; i < part->features.rows(); ++i) out.insert(key(part->features, i));
  EXPECT_EQ(in, out);
}

TEST(PartitionNonIid, InsufficientLabelNamesIt) {
  const auto ds = generate_synthetic(4, 100, 2, 1.0, 1);
  PartitionSpec s;
  s.num_nodes = 5;
  s.samples_per_node = 200;
  s.labels_per_node = 4;  // every node takes 50 of every label: 250 > 100
  try {
    partition_non_iid(ds, s);
    FAIL() << "expected PartitionError";
  } catch (const PartitionError& e) {
    EXPECT_GE(e.label(), 0);
    EXPECT_NE(std::string(e.what()).find("label " + std::to_string(e.label())),
              std::string::npos);
  }
}

TEST(PartitionNonIid, RejectsIndivisibleSampleCount) {
  const auto ds = generate_synthetic(4, 100, 2, 1.0, 1);
  PartitionSpec s;
  s.num_nodes = 2;
  s.samples_per_node = 10;
  s.labels_per_node = 4;
  EXPECT_THROW(partition_non_iid(ds, s), InvalidInput);
}

TEST(InjectSkew, TwentyPercentOfBase120Adds30) {
  EXPECT_EQ(skew_example_count(0.20, 120), 30u);
  EXPECT_EQ(skew_example_count(0.05, 120), 7u);  // ceil(6.315...)
  EXPECT_EQ(skew_example_count(0.0, 120), 0u);

  const auto ds = generate_synthetic(10, 1600, 3, 1.0, 1);
  auto spec = desk_partition();
  spec.skew_ratio = 0.20;
  const auto base = partition_non_iid(ds, spec);
  const auto skewed = inject_skew(base, ds, spec);
  for (std::size_t k = 0; k < skewed.size(); ++k) {
    EXPECT_EQ(skewed[k].test.size(), 150u);
    EXPECT_EQ(skewed[k].skew_count, 30u);
    EXPECT_EQ(skewed[k].train.labels, base[k].train.labels);
    EXPECT_EQ(skewed[k].train.features, base[k].train.features);
    // Appended examples: labels disjoint from the assignment (scan).
    for (std::size_t i = 120; i < 150; ++i)
      EXPECT_FALSE(skewed[k].assigned_labels.contains(skewed[k].test.labels[i]));
  }
}

TEST(InjectSkew, CombinedFractionMatchesRatio) {
  const auto ds = generate_synthetic(10, 1600, 3, 1.0, 1);
  for (double ratio : {0.05, 0.10, 0.15, 0.20, 0.24}) {
    auto spec = desk_partition();
    spec.skew_ratio = ratio;
    for (const auto& s : inject_skew(partition_non_iid(ds, spec), ds, spec)) {
      std::size_t ood = 0;
      for (int l : s.test.labels) ood += !s.assigned_labels.contains(l);
      const double expected = ratio * double(s.test.size());
      EXPECT_LE(std::abs(double(ood) - expected), 1.0) << "ratio " << ratio;
    }
  }
}

TEST(InjectSkew, ZeroRatioReturnsSplitsUnchanged) {
  const auto ds = generate_synthetic(10, 1500, 3, 1.0, 1);
  const auto spec = desk_partition();
  const auto base = partition_non_iid(ds, spec);
  const auto out = inject_skew(base, ds, spec);
  for (std::size_t k = 0; k < base.size(); ++k) {
    EXPECT_EQ(out[k].test.labels, base[k].test.labels);
    EXPECT_EQ(out[k].test.features, base[k].test.features);
  }
}

TEST(InjectSkew, FailsWithoutOutOfDistributionExamples) {
  const auto ds = generate_synthetic(4, 50, 2, 1.0, 1);
  PartitionSpec s;
  s.num_nodes = 2;
  s.samples_per_node = 40;
  s.labels_per_node = 4;  // every label is assigned: nothing out of distribution
  s.skew_ratio = 0.1;
  EXPECT_THROW(inject_skew(partition_non_iid(ds, s), ds, s), SkewError);
}

}  // namespace
}  // namespace scei
