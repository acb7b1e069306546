#pragma once

// Coordinator logic: aggregation, personalization mixing, alpha negotiation
// and the dynamic interquartile defence. Everything here is a pure function
// of its arguments.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "scei/common.hpp"
#include "scei/model.hpp"

namespace scei {

// Node-keyed containers iterate in ascending node id, which is the canonical
// reduction order.
template <typename T>
using ByNode = std::map<NodeId, T>;

class AggregationError : public Error {
 public:
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Aggregation and mixing
// ---------------------------------------------------------------------------

// Unweighted elementwise mean, accumulated in input order as a running mean
// m += (v - m) / k. Unlike sum-then-divide this returns v exactly when every
// input equals v.
inline ParamVector fed_avg(std::span<const ParamVector> locals) {
  if (locals.empty()) throw InvalidInput("fed_avg requires at least one vector");
  const std::size_t n = locals.front().size();
  for (const auto& v : locals)
    if (v.size() != n) throw InvalidInput("fed_avg inputs differ in length");
  ParamVector out = locals.front();
  for (std::size_t k = 1; k < locals.size(); ++k) {
    const double count = double(k + 1);
    for (std::size_t i = 0; i < n; ++i) out[i] += (locals[k][i] - out[i]) / count;
  }
  return out;
}

inline ParamVector fed_avg(const ByNode<ParamVector>& locals) {
  std::vector<ParamVector> ordered;
  ordered.reserve(locals.size());
  for (const auto& [id, v] : locals) ordered.push_back(v);
  return fed_avg(std::span<const ParamVector>(ordered));
}

// alpha * local + (1 - alpha) * global
inline ParamVector mix(const ParamVector& local, const ParamVector& global, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw InvalidInput("alpha must lie in [0, 1]");
  if (local.size() != global.size()) throw InvalidInput("mix inputs differ in length");
  ParamVector out(local.size());
  const double beta = 1.0 - alpha;
  for (std::size_t i = 0; i < local.size(); ++i) out[i] = alpha * local[i] + beta * global[i];
  return out;
}

// ---------------------------------------------------------------------------
// Alpha negotiation
// ---------------------------------------------------------------------------

struct NegotiationGrid {
  std::vector<double> alphas;
  double step = 0.0;

  std::size_t size() const noexcept { return alphas.size(); }
};

// start, start+step, ... up to and including `end` (within 1e-12).
inline NegotiationGrid build_grid(double start, double end, double step) {
  if (!(start >= 0.0 && start < end && end <= 1.0))
    throw InvalidInput("grid requires 0 <= start < end <= 1");
  if (!(step > 0.0)) throw InvalidInput("grid step must be positive");
  NegotiationGrid g;
  g.step = step;
  for (std::size_t i = 0;; ++i) {
    const double a = start + double(i) * step;
    if (a > end + 1e-12) break;
    g.alphas.push_back(std::min(a, end));
  }
  return g;
}

enum class NegotiationPolicy : std::uint8_t { kMaxMean = 0, kMinVariance = 1 };

inline std::string_view to_string(NegotiationPolicy p) {
  return p == NegotiationPolicy::kMaxMean ? "max_mean" : "min_variance";
}

// rows: nodes (ascending id), columns: grid entries.
struct AccuracyMatrix {
  std::vector<NodeId> nodes;
  std::vector<std::vector<double>> rows;

  std::size_t columns() const { return rows.empty() ? 0 : rows.front().size(); }
};

struct ColumnStats {
  double mean = 0.0;
  double variance = 0.0;  // population variance
};

inline ColumnStats column_stats(const AccuracyMatrix& acc, std::size_t col) {
  const double k = double(acc.rows.size());
  double sum = 0.0;
  for (const auto& row : acc.rows) sum += row[col];
  ColumnStats s;
  s.mean = sum / k;
  double sq = 0.0;
  for (const auto& row : acc.rows) sq += (row[col] - s.mean) * (row[col] - s.mean);
  s.variance = sq / k;
  return s;
}

struct NegotiationResult {
  double alpha = 0.0;
  std::size_t index = 0;
};

// Picks the grid column that maximizes the node mean (kMaxMean) or minimizes
// the population variance (kMinVariance). Exact ties go to the smallest alpha.
inline NegotiationResult negotiate_alpha(const AccuracyMatrix& acc, const NegotiationGrid& grid,
                                         NegotiationPolicy policy) {
  if (grid.alphas.empty()) throw InvalidInput("negotiation grid is empty");
  if (acc.rows.empty()) throw InvalidInput("accuracy matrix has no rows");
  for (const auto& row : acc.rows)
    if (row.size() != grid.size())
      throw InvalidInput("accuracy matrix is incomplete for the grid");

  std::size_t best = 0;
  ColumnStats best_stats = column_stats(acc, 0);
  for (std::size_t r = 1; r < grid.size(); ++r) {
    const auto s = column_stats(acc, r);
    const bool better = policy == NegotiationPolicy::kMaxMean ? s.mean > best_stats.mean
                                                              : s.variance < best_stats.variance;
    if (better) {
      best = r;
      best_stats = s;
    }
  }
  return {grid.alphas[best], best};
}

// ---------------------------------------------------------------------------
// Defence
// ---------------------------------------------------------------------------

// L2 distance of each local vector from the temporary global model.
inline std::vector<double> model_diffs(std::span<const ParamVector> locals,
                                       const ParamVector& temp_global) {
  std::vector<double> out;
  out.reserve(locals.size());
  for (const auto& v : locals) {
    if (v.size() != temp_global.size()) throw InvalidInput("model_diffs length mismatch");
    double sq = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double d = v[i] - temp_global[i];
      sq += d * d;
    }
    out.push_back(std::sqrt(sq));
  }
  return out;
}

struct QuantileBounds {
  double lower = 0.25;
  double upper = 0.75;
};

// Quantile levels that widen linearly from (0.25, 0.75) at round 0 to
// (0.10, 0.90) at the final round.
inline QuantileBounds dynamic_bounds(double round, double total_rounds) {
  if (!(total_rounds >= 1.0)) throw InvalidInput("total rounds must be >= 1");
  if (!(round >= 0.0 && round <= total_rounds))
    throw InvalidInput("round must lie in [0, total rounds]");
  return {0.25 - 0.15 / total_rounds * round, 0.75 + 0.15 / total_rounds * round};
}

// Linear interpolation between closest ranks of a sorted sample.
inline double quantile_sorted(std::span<const double> sorted, double level) {
  if (sorted.empty()) throw InvalidInput("quantile of an empty sample");
  const double h = double(sorted.size() - 1) * level;
  const auto lo = std::size_t(std::floor(h));
  if (lo + 1 >= sorted.size()) return sorted.back();
  return sorted[lo] + (h - double(lo)) * (sorted[lo + 1] - sorted[lo]);
}

inline constexpr double kFenceMultiplier = 1.5;
// A sample whose max - min is within these bounds counts as "all nodes agree".
inline constexpr double kAbsoluteSpread = 1e-12;
inline constexpr double kRelativeSpread = 1e-9;

struct DefenceReport {
  ByNode<double> diffs;
  double lb = 0.0;
  double ub = 0.0;
  double q_lb = 0.0;
  double q_ub = 0.0;
  double iqr = 0.0;
  std::set<NodeId> flagged;
  std::set<NodeId> expelled;

  double lower_fence() const { return q_lb - kFenceMultiplier * iqr; }
  double upper_fence() const { return q_ub + kFenceMultiplier * iqr; }
};

// Flags nodes whose diff falls outside [Q_lb - 1.5 IQR, Q_ub + 1.5 IQR].
// No node is flagged when every diff agrees to within an absolute 1e-12 or a
// relative 1e-9. A zero IQR alone does not suppress flags: nine equal diffs
// and one far outlier still flag the outlier.
inline DefenceReport detect_anomalies(const ByNode<double>& diffs, Round round,
                                      Round total_rounds) {
  if (diffs.empty()) throw InvalidInput("detect_anomalies requires at least one diff");
  DefenceReport rep;
  rep.diffs = diffs;
  const auto bounds = dynamic_bounds(round, total_rounds);
  rep.lb = bounds.lower;
  rep.ub = bounds.upper;

  std::vector<double> sorted;
  sorted.reserve(diffs.size());
  for (const auto& [id, d] : diffs) sorted.push_back(d);
  std::sort(sorted.begin(), sorted.end());
  rep.q_lb = quantile_sorted(sorted, rep.lb);
  rep.q_ub = quantile_sorted(sorted, rep.ub);
  rep.iqr = rep.q_ub - rep.q_lb;

  const double lo = sorted.front();
  const double hi = sorted.back();
  const double spread_limit =
      std::max(kAbsoluteSpread, kRelativeSpread * std::max(std::abs(lo), std::abs(hi)));
  if (hi - lo <= spread_limit) return rep;

  const double lower = rep.lower_fence();
  const double upper = rep.upper_fence();
  for (const auto& [id, d] : diffs)
    if (d < lower || d > upper) rep.flagged.insert(id);
  return rep;
}

inline constexpr std::size_t kExpulsionStreak = 5;

struct ContractState {
  Round round = 0;
  Round total_rounds = 0;
  std::set<NodeId> active_nodes;
  ByNode<std::vector<Round>> suspicion_history;
  ByNode<Round> expelled;  // node -> round of expulsion
  std::vector<double> alpha_history;
  NegotiationPolicy policy = NegotiationPolicy::kMaxMean;
};

struct SuspicionUpdate {
  ContractState state;
  std::set<NodeId> expelled;  // newly expelled this round
};

// Records this round's flags; a node flagged in each of rounds t-4..t is
// expelled and leaves the active set.
inline SuspicionUpdate update_suspicions(ContractState state, const DefenceReport& report,
                                         Round t) {
  SuspicionUpdate out;
  for (NodeId k : report.flagged) {
    if (!state.active_nodes.contains(k)) continue;
    auto& hist = state.suspicion_history[k];
    if (hist.empty() || hist.back() != t) hist.push_back(t);
    if (t + 1 < kExpulsionStreak) continue;
    bool streak = hist.size() >= kExpulsionStreak;
    for (std::size_t i = 0; streak && i < kExpulsionStreak; ++i)
      streak = hist[hist.size() - 1 - i] == t - Round(i);
    if (streak) {
      state.active_nodes.erase(k);
      state.expelled[k] = t;
      out.expelled.insert(k);
    }
  }
  state.round = t;
  out.state = std::move(state);
  return out;
}

// FedAvg over the nodes the report did not flag.
inline ParamVector robust_aggregate(const ByNode<ParamVector>& locals,
                                    const DefenceReport& report) {
  std::vector<ParamVector> kept;
  for (const auto& [id, v] : locals)
    if (!report.flagged.contains(id)) kept.push_back(v);
  if (kept.empty()) throw AggregationError("every node was flagged; nothing to aggregate");
  return fed_avg(std::span<const ParamVector>(kept));
}

}  // namespace scei
