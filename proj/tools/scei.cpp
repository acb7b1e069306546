// Command-line front end: run experiments, verify ledger dumps, summarize
// metrics files.

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "scei/harness.hpp"
#include "scei/ledger.hpp"

namespace {

int cmd_run(const std::string& config_path, const std::optional<std::string>& scheme,
            const std::optional<unsigned>& rounds, const std::optional<std::uint64_t>& seed,
            const std::optional<std::string>& out, const std::optional<std::string>& ledger_out) {
  auto cfg = scei::load_config(config_path);
  if (scheme) cfg.scheme = scei::parse_scheme(*scheme);
  if (rounds) cfg.rounds = *rounds;
  if (seed) cfg.seed = *seed;
  if (out) cfg.output_path = *out;
  if (ledger_out) cfg.ledger_path = *ledger_out;
  if (cfg.output_path.empty()) throw scei::ConfigError("no output path (set 'output' or --out)");

  auto result = scei::run_experiment(cfg);
  scei::write_csv(result.metrics, cfg.output_path);
  if (!cfg.ledger_path.empty()) result.ledger->write_dump(cfg.ledger_path);

  const auto summary = scei::summarize(result.metrics);
  const auto& last = summary.rounds.back();
  std::printf("scheme %s: %u rounds, final mean accuracy %.4f over %zu nodes, %zu ledger records\n",
              cfg.scheme.name().c_str(), unsigned(last.round), last.mean, last.nodes,
              result.ledger->size());
  for (const auto& [node, round] : result.contract.expelled)
    std::printf("node %u expelled at round %u\n", unsigned(node), unsigned(round));
  return 0;
}

int cmd_verify(const std::string& dump_path) {
  const auto bytes = scei::read_binary_file(dump_path);
  const auto contents = scei::decode_dump(bytes);
  if (auto bad = scei::verify_dump(bytes)) {
    std::printf("TAMPERED: first bad record index %zu (%zu records parsed)\n", *bad,
                contents.records.size());
    return 1;
  }
  std::printf("OK: %zu records, chain intact\n", contents.records.size());
  return 0;
}

int cmd_summarize(const std::string& csv_path, const std::optional<double>& threshold) {
  const auto metrics = scei::read_csv(csv_path);
  const auto s = scei::summarize(metrics, threshold);
  std::printf("round,nodes,mean_accuracy,variance\n");
  for (const auto& r : s.rounds)
    std::printf("%u,%zu,%.6f,%.6f\n", unsigned(r.round), r.nodes, r.mean, r.variance);
  if (threshold) {
    if (s.rounds_to_threshold)
      std::printf("rounds_to_threshold(%.4f) = %u\n", *threshold, unsigned(*s.rounds_to_threshold));
    else
      std::printf("rounds_to_threshold(%.4f) = none\n", *threshold);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Smart-contract personalized federated learning simulator"};
  app.require_subcommand(1);

  auto* run = app.add_subcommand("run", "Run an experiment and write per-round metrics");
  std::string config_path;
  std::optional<std::string> scheme, out, ledger_out;
  std::optional<unsigned> rounds;
  std::optional<std::uint64_t> seed;
  run->add_option("--config", config_path, "Experiment config file")->required();
  run->add_option("--scheme", scheme, "scei | fedavg | local | fixed:<alpha>");
  run->add_option("--rounds", rounds, "Number of federated rounds");
  run->add_option("--seed", seed, "Experiment seed");
  run->add_option("--out", out, "Metrics CSV path");
  run->add_option("--ledger-out", ledger_out, "Write the ledger dump here");

  auto* verify = app.add_subcommand("verify-ledger", "Check a ledger dump's hash chain");
  std::string dump_path;
  verify->add_option("dump", dump_path, "Ledger dump file")->required();

  auto* summarize = app.add_subcommand("summarize", "Per-round mean/variance of a metrics CSV");
  std::string csv_path;
  std::optional<double> threshold;
  summarize->add_option("csv", csv_path, "Metrics CSV")->required();
  summarize->add_option("--threshold", threshold, "Report the first round reaching this mean");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) return cmd_run(config_path, scheme, rounds, seed, out, ledger_out);
    if (*verify) return cmd_verify(dump_path);
    if (*summarize) return cmd_summarize(csv_path, threshold);
  } catch (const scei::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
