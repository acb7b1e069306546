#pragma once

// Experiment orchestration: configuration, the barrier-synchronized round
// loop for every scheme, CSV metrics and summaries.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "scei/common.hpp"
#include "scei/contract.hpp"
#include "scei/data.hpp"
#include "scei/ledger.hpp"
#include "scei/model.hpp"
#include "scei/node.hpp"

namespace scei {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

class ConfigError : public Error {
 public:
  using Error::Error;
};

struct Scheme {
  enum class Kind { kScei, kFedAvg, kLocal, kFixedAlpha };
  Kind kind = Kind::kScei;
  double alpha = 0.0;  // kFixedAlpha only

  static Scheme scei() { return {Kind::kScei, 0.0}; }
  static Scheme fed_avg() { return {Kind::kFedAvg, 0.0}; }
  static Scheme local() { return {Kind::kLocal, 0.0}; }
  static Scheme fixed(double a) { return {Kind::kFixedAlpha, a}; }

  std::string name() const {
    switch (kind) {
      case Kind::kScei: return "scei";
      case Kind::kFedAvg: return "fedavg";
      case Kind::kLocal: return "local";
      case Kind::kFixedAlpha: {
        std::ostringstream os;
        os << "fixed:" << alpha;
        return os.str();
      }
    }
    return "?";
  }
};

// Accepts "scei", "fedavg", "local" or "fixed:<alpha>".
inline Scheme parse_scheme(const std::string& s) {
  if (s == "scei") return Scheme::scei();
  if (s == "fedavg") return Scheme::fed_avg();
  if (s == "local") return Scheme::local();
  if (s.rfind("fixed:", 0) == 0) {
    try {
      std::size_t used = 0;
      const double a = std::stod(s.substr(6), &used);
      if (used == s.size() - 6) return Scheme::fixed(a);
    } catch (const std::exception&) {
    }
  }
  throw ConfigError("unknown scheme '" + s + "' (expected scei, fedavg, local or fixed:<alpha>)");
}

inline NegotiationPolicy parse_policy(const std::string& s) {
  if (s == "max_mean") return NegotiationPolicy::kMaxMean;
  if (s == "min_variance") return NegotiationPolicy::kMinVariance;
  throw ConfigError("unknown policy '" + s + "' (expected max_mean or min_variance)");
}

// auto: the defence runs for the SCEI scheme only.
enum class DefenceMode { kAuto, kOn, kOff };

inline DefenceMode parse_defence(const std::string& s) {
  if (s == "auto") return DefenceMode::kAuto;
  if (s == "on") return DefenceMode::kOn;
  if (s == "off") return DefenceMode::kOff;
  throw ConfigError("unknown defence mode '" + s + "' (expected auto, on or off)");
}

struct AttackSpec {
  NodeId node = 0;
  Attack attack = NoAttack{};
};

// Comma-separated "node:noise:sigma:start" or "node:signflip:start" items.
inline std::vector<AttackSpec> parse_attacks(const std::string& text) {
  std::vector<AttackSpec> out;
  std::stringstream items(text);
  std::string item;
  while (std::getline(items, item, ',')) {
    item.erase(0, item.find_first_not_of(" \t"));
    item.erase(item.find_last_not_of(" \t") + 1);
    if (item.empty()) continue;
    std::vector<std::string> f;
    std::stringstream fields(item);
    for (std::string x; std::getline(fields, x, ':');) f.push_back(x);
    try {
      AttackSpec a;
      a.node = NodeId(std::stoul(f.at(0)));
      if (f.at(1) == "noise" && f.size() == 4) {
        a.attack = AdditiveNoise{std::stod(f[2]), Round(std::stoul(f[3]))};
      } else if (f.at(1) == "signflip" && f.size() == 3) {
        a.attack = SignFlip{Round(std::stoul(f[2]))};
      } else {
        throw ConfigError("");
      }
      out.push_back(a);
    } catch (const std::exception&) {
      throw ConfigError("malformed attack '" + item +
                        "' (expected node:noise:sigma:start or node:signflip:start)");
    }
  }
  return out;
}

struct SyntheticSource {
  std::size_t num_classes = 10;
  std::size_t per_class = 2000;
  std::size_t input_dim = 20;
  double separation = 4.0;
};

struct MnistSource {
  std::string images_path;
  std::string labels_path;
};

struct ExperimentConfig {
  Scheme scheme = Scheme::scei();
  std::variant<SyntheticSource, MnistSource> dataset = SyntheticSource{};
  PartitionSpec partition;
  std::array<std::size_t, 2> hidden_dims{200, 200};
  TrainingConfig training;
  Round rounds = 50;
  double grid_start = 0.5;
  double grid_end = 0.8;
  double grid_step = 0.05;
  NegotiationPolicy policy = NegotiationPolicy::kMaxMean;
  DefenceMode defence = DefenceMode::kAuto;
  std::vector<AttackSpec> attacks;
  std::uint64_t seed = 1;
  std::string output_path;
  std::string ledger_path;

  bool defence_enabled() const {
    return defence == DefenceMode::kOn ||
           (defence == DefenceMode::kAuto && scheme.kind == Scheme::Kind::kScei);
  }

  void validate() const {
    if (rounds < 1) throw ConfigError("rounds must be >= 1");
    if (partition.num_nodes < 2) throw ConfigError("at least two nodes are required");
    if (scheme.kind == Scheme::Kind::kFixedAlpha && !(scheme.alpha >= 0.0 && scheme.alpha <= 1.0))
      throw ConfigError("fixed alpha must lie in [0, 1]");
    for (const auto& a : attacks)
      if (a.node >= partition.num_nodes)
        throw ConfigError("attack targets node " + std::to_string(a.node) +
                          " but only " + std::to_string(partition.num_nodes) + " nodes exist");
    try {
      partition.validate();
      training.validate();
      if (scheme.kind == Scheme::Kind::kScei) build_grid(grid_start, grid_end, grid_step);
    } catch (const InvalidInput& e) {
      throw ConfigError(e.what());
    }
  }
};

// Reads a flat `key = value` file. Unknown keys are rejected.
inline ExperimentConfig load_config(const std::string& path) {
  boost::property_tree::ptree pt;
  try {
    boost::property_tree::ini_parser::read_ini(path, pt);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(e.what());
  }

  static const std::set<std::string> known = {
      "scheme", "fixed_alpha", "dataset", "mnist_images", "mnist_labels",
      "synthetic_classes", "synthetic_per_class", "synthetic_dim", "synthetic_separation",
      "nodes", "samples_per_node", "labels_per_node", "skew_ratio", "test_fraction",
      "hidden1", "hidden2", "batch_size", "local_epochs", "learning_rate", "rounds",
      "grid_start", "grid_end", "grid_step", "policy", "defence", "attacks", "seed",
      "output", "ledger_output"};
  for (const auto& [key, child] : pt) {
    if (!child.empty()) throw ConfigError("sections are not supported ('" + key + "')");
    if (!known.contains(key)) throw ConfigError("unknown config key '" + key + "'");
  }

  ExperimentConfig c;
  try {
    auto str = [&](const char* k, const std::string& d) { return pt.get<std::string>(k, d); };
    std::string scheme = str("scheme", "scei");
    if (scheme == "fixed") scheme = "fixed:" + str("fixed_alpha", "0.5");
    c.scheme = parse_scheme(scheme);

    const std::string dataset = str("dataset", "synthetic");
    if (dataset == "synthetic") {
      SyntheticSource s;
      s.num_classes = pt.get("synthetic_classes", s.num_classes);
      s.per_class = pt.get("synthetic_per_class", s.per_class);
      s.input_dim = pt.get("synthetic_dim", s.input_dim);
      s.separation = pt.get("synthetic_separation", s.separation);
      c.dataset = s;
    } else if (dataset == "mnist") {
      c.dataset = MnistSource{str("mnist_images", ""), str("mnist_labels", "")};
    } else {
      throw ConfigError("unknown dataset '" + dataset + "' (expected synthetic or mnist)");
    }

    c.partition.num_nodes = pt.get("nodes", c.partition.num_nodes);
    c.partition.samples_per_node = pt.get("samples_per_node", c.partition.samples_per_node);
    c.partition.labels_per_node = pt.get("labels_per_node", c.partition.labels_per_node);
    c.partition.skew_ratio = pt.get("skew_ratio", c.partition.skew_ratio);
    c.partition.test_fraction = pt.get("test_fraction", c.partition.test_fraction);
    c.hidden_dims[0] = pt.get("hidden1", c.hidden_dims[0]);
    c.hidden_dims[1] = pt.get("hidden2", c.hidden_dims[1]);
    c.training.batch_size = pt.get("batch_size", c.training.batch_size);
    c.training.local_epochs = pt.get("local_epochs", c.training.local_epochs);
    c.training.learning_rate = pt.get("learning_rate", c.training.learning_rate);
    c.rounds = pt.get("rounds", c.rounds);
    c.grid_start = pt.get("grid_start", c.grid_start);
    c.grid_end = pt.get("grid_end", c.grid_end);
    c.grid_step = pt.get("grid_step", c.grid_step);
    c.policy = parse_policy(str("policy", "max_mean"));
    c.defence = parse_defence(str("defence", "auto"));
    c.attacks = parse_attacks(str("attacks", ""));
    c.seed = pt.get("seed", c.seed);
    c.output_path = str("output", "");
    c.ledger_path = str("ledger_output", "");
  } catch (const boost::property_tree::ptree_bad_data& e) {
    throw ConfigError(std::string("bad config value: ") + e.what());
  }
  return c;
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

struct RoundMetrics {
  Round round = 0;
  NodeId node_id = 0;
  double accuracy = 0.0;
  std::optional<double> alpha;  // negotiated alpha, SCEI only
  bool flagged = false;
  bool expelled = false;
  double train_s = 0.0;
  double negotiate_s = 0.0;
  double ledger_s = 0.0;
};

struct ExperimentResult {
  std::vector<RoundMetrics> metrics;
  std::unique_ptr<Ledger> ledger;
  ContractState contract;
};

// ---------------------------------------------------------------------------
// Round loop
// ---------------------------------------------------------------------------

struct ProtocolSettings {
  Scheme scheme = Scheme::scei();
  MlpArchitecture arch;
  TrainingConfig training;
  Round rounds = 1;
  NegotiationGrid grid;
  NegotiationPolicy policy = NegotiationPolicy::kMaxMean;
  bool defence = true;
};

namespace detail {

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

inline ByNode<ParamVector> read_weights(const Ledger& ledger, Round t, RecordKind kind) {
  ByNode<ParamVector> out;
  for (const auto& r : ledger.query_round(t, kind))
    out.emplace(r.node_id.value_or(0), payload::decode_params(r.payload));
  return out;
}

inline ParamVector read_global(const Ledger& ledger, Round t) {
  auto recs = ledger.query_round(t, RecordKind::kGlobalWeights);
  if (recs.empty()) throw Error("no global weights committed for round " + std::to_string(t));
  return payload::decode_params(recs.back().payload);
}

}  // namespace detail

// Runs the protocol over prepared nodes. Per round: local training and
// upload, defence, aggregation, candidate evaluation and negotiation,
// personalization, metrics. Every cross-node artifact is committed to the
// ledger and read back from it before use.
inline ExperimentResult run_rounds(std::vector<NodeState> nodes, const ProtocolSettings& s,
                                   const ParamVector& initial_global) {
  using Kind = Scheme::Kind;
  const bool aggregate = s.scheme.kind != Kind::kLocal;
  const bool negotiate = s.scheme.kind == Kind::kScei;
  if (negotiate && s.grid.alphas.empty()) throw InvalidInput("SCEI needs a negotiation grid");
  std::sort(nodes.begin(), nodes.end(),
            [](const NodeState& a, const NodeState& b) { return a.node_id < b.node_id; });

  ExperimentResult res;
  res.ledger = std::make_unique<Ledger>();
  Ledger& ledger = *res.ledger;
  ContractState& state = res.contract;
  state.total_rounds = s.rounds;
  state.policy = s.policy;
  for (const auto& n : nodes) state.active_nodes.insert(n.node_id);

  ParamVector start = initial_global;
  if (aggregate) {
    ledger.append(0, RecordKind::kGlobalWeights, std::nullopt,
                  payload::encode_params(initial_global));
    start = detail::read_global(ledger, 0);
  }
  if (negotiate)
    ledger.append(0, RecordKind::kAlphaDecision, std::nullopt,
                  payload::encode_alpha({s.grid.alphas.front(), 0, std::uint8_t(s.policy)}));
  for (auto& n : nodes) n.personalized = n.local = start;

  for (Round t = 1; t <= s.rounds; ++t) {
    std::vector<NodeState*> participants;
    for (auto& n : nodes)
      if (state.active_nodes.contains(n.node_id)) participants.push_back(&n);
    if (participants.empty()) throw AggregationError("no active nodes left at round " + std::to_string(t));

    ByNode<RoundMetrics> rows;
    double ledger_s = 0.0;

    // Local training and upload.
    for (NodeState* n : participants) {
      auto& row = rows[n->node_id];
      row.round = t;
      row.node_id = n->node_id;
      detail::Stopwatch sw;
      ParamVector upload = local_round(*n, s.arch, s.training, t);
      row.train_s = sw.seconds();
      detail::Stopwatch lw;
      ledger.append(t, RecordKind::kLocalWeights, n->node_id, payload::encode_params(upload));
      ledger_s += lw.seconds();
    }

    // Defence.
    DefenceReport report;
    std::set<NodeId> expelled_now;
    if (s.defence || aggregate) {
      detail::Stopwatch lw;
      auto uploads = detail::read_weights(ledger, t, RecordKind::kLocalWeights);
      ledger_s += lw.seconds();

      if (s.defence) {
        std::vector<ParamVector> ordered;
        std::vector<NodeId> ids;
        for (const auto& [id, v] : uploads) {
          ids.push_back(id);
          ordered.push_back(v);
        }
        const ParamVector temp = fed_avg(std::span<const ParamVector>(ordered));
        const auto d = model_diffs(ordered, temp);
        ByNode<double> diffs;
        for (std::size_t i = 0; i < ids.size(); ++i) diffs[ids[i]] = d[i];
        report = detect_anomalies(diffs, t, s.rounds);
        auto upd = update_suspicions(state, report, t);
        state = std::move(upd.state);
        expelled_now = upd.expelled;
        report.expelled = expelled_now;

        detail::Stopwatch aw;
        std::vector<NodeId> flagged(report.flagged.begin(), report.flagged.end());
        ledger.append(t, RecordKind::kSuspicionSet, std::nullopt, payload::encode_nodes(flagged));
        for (NodeId k : expelled_now) {
          const NodeId one[] = {k};
          ledger.append(t, RecordKind::kExpulsion, k, payload::encode_nodes(one));
        }
        ledger_s += aw.seconds();
      }

      if (aggregate) {
        ParamVector g;
        try {
          g = robust_aggregate(uploads, report);
        } catch (const AggregationError&) {
          throw AggregationError("round " + std::to_string(t) +
                                 ": every node was flagged; aggregation aborted");
        }
        detail::Stopwatch gw;
        ledger.append(t, RecordKind::kGlobalWeights, std::nullopt, payload::encode_params(g));
        ledger_s += gw.seconds();
      }
    }
    state.round = t;

    ParamVector global;
    if (aggregate) {
      detail::Stopwatch lw;
      global = detail::read_global(ledger, t);
      ledger_s += lw.seconds();
    }

    // Mixing weight for this round.
    double alpha = 1.0;
    if (s.scheme.kind == Kind::kFedAvg) alpha = 0.0;
    if (s.scheme.kind == Kind::kFixedAlpha) alpha = s.scheme.alpha;
    if (negotiate) {
      for (NodeState* n : participants) {
        if (report.flagged.contains(n->node_id)) continue;
        detail::Stopwatch sw;
        auto cand = evaluate_candidates(*n, s.arch, global, s.grid);
        rows[n->node_id].negotiate_s = sw.seconds();
        detail::Stopwatch lw;
        ledger.append(t, RecordKind::kAccuracyList, n->node_id,
                      payload::encode_accuracies(cand.entries()));
        ledger_s += lw.seconds();
      }
      AccuracyMatrix acc;
      for (const auto& r : ledger.query_round(t, RecordKind::kAccuracyList)) {
        acc.nodes.push_back(r.node_id.value_or(0));
        std::vector<double> row;
        for (const auto& e : payload::decode_accuracies(r.payload)) row.push_back(e.accuracy);
        acc.rows.push_back(std::move(row));
      }
      const auto chosen = negotiate_alpha(acc, s.grid, s.policy);
      ledger.append(t, RecordKind::kAlphaDecision, std::nullopt,
                    payload::encode_alpha({chosen.alpha, chosen.index, std::uint8_t(s.policy)}));
      alpha = payload::decode_alpha(ledger.query_round(t, RecordKind::kAlphaDecision).back().payload)
                  .alpha;
      state.alpha_history.push_back(alpha);
    }

    // Personalization and metrics.
    for (NodeState* n : participants) {
      if (aggregate) apply_alpha(*n, global, alpha);
      else n->personalized = n->local;
      auto& row = rows[n->node_id];
      row.accuracy = evaluate(n->personalized, s.arch, n->split.test.examples());
      if (negotiate) row.alpha = alpha;
      row.flagged = report.flagged.contains(n->node_id);
      row.expelled = expelled_now.contains(n->node_id);
      row.ledger_s = ledger_s;
      res.metrics.push_back(row);
    }
  }
  return res;
}

inline LabeledDataset load_dataset(const ExperimentConfig& cfg) {
  if (const auto* syn = std::get_if<SyntheticSource>(&cfg.dataset))
    return generate_synthetic(syn->num_classes, syn->per_class, syn->input_dim, syn->separation,
                              derive_seed(cfg.seed, {tag(SeedPurpose::kSynthetic)}));
  const auto& m = std::get<MnistSource>(cfg.dataset);
  return load_mnist_idx(m.images_path, m.labels_path);
}

struct PreparedExperiment {
  std::vector<NodeState> nodes;
  ProtocolSettings settings;
  ParamVector initial_global;
};

inline PreparedExperiment prepare_experiment(const ExperimentConfig& cfg,
                                             const LabeledDataset& ds) {
  cfg.validate();
  PreparedExperiment p;
  auto& s = p.settings;
  s.scheme = cfg.scheme;
  s.arch = MlpArchitecture{ds.input_dim(), cfg.hidden_dims, ds.num_classes};
  s.arch.validate();
  s.training = cfg.training;
  s.rounds = cfg.rounds;
  if (cfg.scheme.kind == Scheme::Kind::kScei)
    s.grid = build_grid(cfg.grid_start, cfg.grid_end, cfg.grid_step);
  s.policy = cfg.policy;
  s.defence = cfg.defence_enabled();

  PartitionSpec spec = cfg.partition;
  spec.rng_seed = derive_seed(cfg.seed, {tag(SeedPurpose::kPartition)});
  auto splits = inject_skew(partition_non_iid(ds, spec), ds, spec);

  p.initial_global = init_params(s.arch, derive_seed(cfg.seed, {tag(SeedPurpose::kInit)}));
  for (std::size_t k = 0; k < splits.size(); ++k) {
    Attack attack = NoAttack{};
    for (const auto& a : cfg.attacks)
      if (a.node == k) attack = a.attack;
    p.nodes.push_back(make_node(NodeId(k), std::move(splits[k]), p.initial_global,
                                derive_seed(cfg.seed, {tag(SeedPurpose::kNode), k}), attack));
  }
  return p;
}

inline ExperimentResult run_experiment(const ExperimentConfig& cfg, const LabeledDataset& ds) {
  auto p = prepare_experiment(cfg, ds);
  return run_rounds(std::move(p.nodes), p.settings, p.initial_global);
}

inline ExperimentResult run_experiment(const ExperimentConfig& cfg) {
  return run_experiment(cfg, load_dataset(cfg));
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

inline constexpr const char* kCsvHeader =
    "round,node_id,accuracy,alpha,flagged,expelled,train_s,negotiate_s,ledger_s";

inline std::string format_fixed6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

inline void write_csv(std::span<const RoundMetrics> metrics, const std::string& path) {
  if (metrics.empty()) throw InvalidInput("no metrics to write");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path);
  out << kCsvHeader << '\n';
  for (const auto& m : metrics) {
    out << m.round << ',' << m.node_id << ',' << format_fixed6(m.accuracy) << ','
        << (m.alpha ? format_fixed6(*m.alpha) : std::string()) << ',' << int(m.flagged) << ','
        << int(m.expelled) << ',' << format_fixed6(m.train_s) << ','
        << format_fixed6(m.negotiate_s) << ',' << format_fixed6(m.ledger_s) << '\n';
  }
  if (!out) throw Error("write failed for " + path);
}

inline std::vector<RoundMetrics> read_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  std::string line;
  if (!std::getline(in, line) || line != kCsvHeader)
    throw Error(path + ": missing or unexpected CSV header");
  std::vector<RoundMetrics> out;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string x; std::getline(ss, x, ',');) f.push_back(x);
    if (line.back() == ',') f.emplace_back();
    if (f.size() != 9) throw Error(path + ":" + std::to_string(lineno) + ": expected 9 fields");
    try {
      RoundMetrics m;
      m.round = Round(std::stoul(f[0]));
      m.node_id = NodeId(std::stoul(f[1]));
      m.accuracy = std::stod(f[2]);
      if (!f[3].empty()) m.alpha = std::stod(f[3]);
      m.flagged = f[4] == "1";
      m.expelled = f[5] == "1";
      m.train_s = std::stod(f[6]);
      m.negotiate_s = std::stod(f[7]);
      m.ledger_s = std::stod(f[8]);
      out.push_back(m);
    } catch (const std::exception&) {
      throw Error(path + ":" + std::to_string(lineno) + ": malformed field");
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Summaries
// ---------------------------------------------------------------------------

struct RoundSummary {
  Round round = 0;
  std::size_t nodes = 0;
  double mean = 0.0;
  double variance = 0.0;  // population variance across nodes
};

struct Summary {
  std::vector<RoundSummary> rounds;
  std::optional<Round> rounds_to_threshold;
};

inline Summary summarize(std::span<const RoundMetrics> metrics,
                         std::optional<double> threshold = std::nullopt) {
  std::map<Round, std::vector<double>> by_round;
  for (const auto& m : metrics) by_round[m.round].push_back(m.accuracy);
  Summary s;
  for (const auto& [t, acc] : by_round) {
    RoundSummary r;
    r.round = t;
    r.nodes = acc.size();
    double sum = 0.0;
    for (double a : acc) sum += a;
    r.mean = sum / double(acc.size());
    double sq = 0.0;
    for (double a : acc) sq += (a - r.mean) * (a - r.mean);
    r.variance = sq / double(acc.size());
    s.rounds.push_back(r);
    if (threshold && !s.rounds_to_threshold && r.mean >= *threshold) s.rounds_to_threshold = t;
  }
  return s;
}

}  // namespace scei
