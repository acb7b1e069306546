#pragma once

#include <cstdint>
#include <random>
#include <variant>
#include <vector>

#include "scei/common.hpp"
#include "scei/contract.hpp"
#include "scei/data.hpp"
#include "scei/ledger.hpp"
#include "scei/model.hpp"

namespace scei {

struct NoAttack {
  friend bool operator==(const NoAttack&, const NoAttack&) = default;
};

// Upload = honest weights + N(0, sigma^2) per entry.
struct AdditiveNoise {
  double sigma = 10.0;
  Round start_round = 1;
  friend bool operator==(const AdditiveNoise&, const AdditiveNoise&) = default;
};

// Upload = -honest weights.
struct SignFlip {
  Round start_round = 1;
  friend bool operator==(const SignFlip&, const SignFlip&) = default;
};

using Attack = std::variant<NoAttack, AdditiveNoise, SignFlip>;

inline bool attack_active(const Attack& a, Round t) {
  return std::visit(
      [t](const auto& x) {
        using T = std::decay_t<decltype(x)>;
        if constexpr (std::is_same_v<T, NoAttack>) return false;
        else return t >= x.start_round;
      },
      a);
}

struct NodeState {
  NodeId node_id = 0;
  NodeDataSplit split;
  ParamVector personalized;  // w_P
  ParamVector local;         // w_L, always the honest value
  Attack attack = NoAttack{};
  std::uint64_t seed = 0;    // base of the node's training and noise streams
};

inline NodeState make_node(NodeId id, NodeDataSplit split, const ParamVector& initial,
                           std::uint64_t seed, Attack attack = NoAttack{}) {
  NodeState n;
  n.node_id = id;
  n.split = std::move(split);
  n.personalized = initial;
  n.local = initial;
  n.attack = attack;
  n.seed = seed;
  return n;
}

// Corruption applied to an upload at round t; honest weights pass through.
inline ParamVector corrupt_upload(const ParamVector& honest, const Attack& attack,
                                  std::uint64_t seed, Round t) {
  if (!attack_active(attack, t)) return honest;
  ParamVector out = honest;
  if (const auto* noise = std::get_if<AdditiveNoise>(&attack)) {
    std::mt19937_64 rng(derive_seed(seed, {tag(SeedPurpose::kNoise), t}));
    std::normal_distribution<double> dist(0.0, noise->sigma);
    for (auto& v : out) v += dist(rng);
  } else {
    for (auto& v : out) v = -v;
  }
  return out;
}

// Trains from w_P^{t-1}, keeps the honest result as w_L and returns the
// vector the node uploads.
inline ParamVector local_round(NodeState& node, const MlpArchitecture& arch,
                               const TrainingConfig& cfg, Round t) {
  TrainingConfig round_cfg = cfg;
  round_cfg.rng_seed = derive_seed(node.seed, {tag(SeedPurpose::kTrain), t});
  node.local = sgd_train(node.personalized, arch, round_cfg, node.split.train.examples());
  return corrupt_upload(node.local, node.attack, node.seed, t);
}

struct CandidateReport {
  NodeId node_id = 0;
  std::vector<double> accuracies;
  std::vector<double> alphas;

  std::vector<payload::AccuracyEntry> entries() const {
    std::vector<payload::AccuracyEntry> out;
    for (std::size_t i = 0; i < alphas.size(); ++i) out.push_back({alphas[i], accuracies[i]});
    return out;
  }
};

// Local test accuracy of mix(w_L, global, alpha) for every grid alpha.
inline CandidateReport evaluate_candidates(const NodeState& node, const MlpArchitecture& arch,
                                           const ParamVector& global,
                                           const NegotiationGrid& grid) {
  if (grid.alphas.empty()) throw InvalidInput("candidate grid is empty");
  CandidateReport rep;
  rep.node_id = node.node_id;
  rep.alphas = grid.alphas;
  for (double a : grid.alphas)
    rep.accuracies.push_back(evaluate(mix(node.local, global, a), arch, node.split.test.examples()));
  return rep;
}

inline void apply_alpha(NodeState& node, const ParamVector& global, double alpha) {
  node.personalized = mix(node.local, global, alpha);
}

}  // namespace scei
