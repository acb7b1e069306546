#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "scei/node.hpp"

namespace scei {
namespace {

struct Fixture {
  LabeledDataset ds = generate_synthetic(4, 200, 6, 3.0, 11);
  MlpArchitecture arch{6, {8, 8}, 4};
  TrainingConfig cfg{10, 1, 0.05, 0};
  std::vector<NodeDataSplit> splits = [this] {
    PartitionSpec spec;
    spec.num_nodes = 2;
    spec.samples_per_node = 100;
    spec.labels_per_node = 2;
    spec.rng_seed = 5;
    return partition_non_iid(ds, spec);
  }();
  ParamVector init = init_params(arch, 3);
};

double norm(const ParamVector& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

TEST(CorruptUpload, HonestUploadIsUnchanged) {
  const ParamVector w{1.5, -2.0, 0.25};
  EXPECT_EQ(corrupt_upload(w, NoAttack{}, 1, 3), w);
  // Not yet active.
  EXPECT_EQ(corrupt_upload(w, AdditiveNoise{10.0, 39}, 1, 38), w);
  EXPECT_EQ(corrupt_upload(w, SignFlip{4}, 1, 3), w);
}

TEST(CorruptUpload, SignFlipNegates) {
  EXPECT_EQ(corrupt_upload(ParamVector{1, -2}, SignFlip{1}, 1, 1), (ParamVector{-1, 2}));
}

TEST(CorruptUpload, NoiseNormScalesWithSigma) {
  const std::size_t p = 4000;
  const ParamVector zero(p, 0.0);
  for (double sigma : {0.5, 10.0}) {
    for (Round t = 1; t <= 5; ++t) {
      const auto up = corrupt_upload(zero, AdditiveNoise{sigma, 1}, 42, t);
      const double expected = sigma * std::sqrt(double(p));
      EXPECT_NEAR(norm(up), expected, 0.2 * expected);
    }
  }
}

TEST(CorruptUpload, NoiseIsSeededPerRound) {
  const ParamVector zero(50, 0.0);
  const AdditiveNoise a{1.0, 1};
  EXPECT_EQ(corrupt_upload(zero, a, 7, 2), corrupt_upload(zero, a, 7, 2));
  EXPECT_NE(corrupt_upload(zero, a, 7, 2), corrupt_upload(zero, a, 7, 3));
  EXPECT_NE(corrupt_upload(zero, a, 7, 2), corrupt_upload(zero, a, 8, 2));
}

TEST(LocalRound, AttackedNodeKeepsHonestState) {
  Fixture f;
  auto honest = make_node(0, f.splits[0], f.init, 99);
  auto attacked = make_node(0, f.splits[0], f.init, 99, AdditiveNoise{10.0, 1});
  const auto up_h = local_round(honest, f.arch, f.cfg, 1);
  const auto up_a = local_round(attacked, f.arch, f.cfg, 1);
  EXPECT_EQ(up_h, honest.local);
  EXPECT_EQ(attacked.local, honest.local);
  EXPECT_NE(up_a, attacked.local);
  EXPECT_EQ(attacked.personalized, f.init);
}

TEST(EvaluateCandidates, GlobalEqualToLocalGivesFlatRow) {
  Fixture f;
  auto n = make_node(1, f.splits[1], f.init, 4);
  local_round(n, f.arch, f.cfg, 1);
  const auto grid = build_grid(0.5, 0.8, 0.05);
  const auto rep = evaluate_candidates(n, f.arch, n.local, grid);
  ASSERT_EQ(rep.accuracies.size(), grid.size());
  const double own = evaluate(n.local, f.arch, n.split.test.examples());
  for (double a : rep.accuracies) EXPECT_EQ(a, own);
  EXPECT_EQ(rep.node_id, 1u);
}

TEST(EvaluateCandidates, EndpointGrids) {
  Fixture f;
  auto n = make_node(0, f.splits[0], f.init, 4);
  local_round(n, f.arch, f.cfg, 1);
  const ParamVector global = init_params(f.arch, 77);
  const auto test = n.split.test.examples();
  const auto at0 = evaluate_candidates(n, f.arch, global, NegotiationGrid{{0.0}, 0.1});
  EXPECT_EQ(at0.accuracies, std::vector<double>{evaluate(global, f.arch, test)});
  const auto at1 = evaluate_candidates(n, f.arch, global, NegotiationGrid{{1.0}, 0.1});
  EXPECT_EQ(at1.accuracies, std::vector<double>{evaluate(n.local, f.arch, test)});
  EXPECT_THROW(evaluate_candidates(n, f.arch, global, NegotiationGrid{}), InvalidInput);
}

TEST(ApplyAlpha, MatchesMix) {
  Fixture f;
  auto n = make_node(0, f.splits[0], f.init, 4);
  local_round(n, f.arch, f.cfg, 1);
  const ParamVector global = init_params(f.arch, 77);
  apply_alpha(n, global, 0.0);
  EXPECT_EQ(n.personalized, global);
  apply_alpha(n, global, 1.0);
  EXPECT_EQ(n.personalized, n.local);
  apply_alpha(n, global, 0.65);
  EXPECT_EQ(n.personalized, mix(n.local, global, 0.65));
}

}  // namespace
}  // namespace scei
